"""Training loops: plain, adversarial and knowledge distillation.

All loops use Adam with a learning rate that decays linearly from ``lr0`` to
zero over the run, and are bit-reproducible for a fixed seed.
"""
from __future__ import annotations

import dataclasses
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import attacks
from . import tensor as T
from .attacks import AttackConfig
from .binio import Reader, check_crc, with_crc
from .data import Dataset, batches
from .errors import ConfigError, DataError, FormatError, NumericError
from .nn import Model

logger = logging.getLogger(__name__)

MIX_MODES = ("augment", "replace")


@dataclass
class AdversarialSpec:
    attack: str = "bim"
    config: AttackConfig = field(default_factory=AttackConfig)
    mix_mode: str = "augment"

    def __post_init__(self):
        attacks.check_name(self.attack)
        if self.mix_mode not in MIX_MODES:
            raise ConfigError(f"mix_mode must be one of {MIX_MODES}, got {self.mix_mode!r}")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 5e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    adversarial: Optional[AdversarialSpec] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = "linear-decay-to-zero"
        return d


@dataclass
class KDConfig:
    alpha: float = 0.1
    temperature: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def linear_decay(lr0: float, step: int, total_steps: int) -> float:
    return lr0 * max(0.0, 1.0 - step / total_steps)


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params: Sequence[T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            update = (lr / c1) * self.m[i] / (np.sqrt(self.v[i] / c2) + self.eps)
            # fresh array: recorded tensors keep their (read-only) buffers
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


LossFn = Callable[[Model, np.ndarray, np.ndarray, np.ndarray, int], tuple]


def _fit(model: Model, dataset: Dataset, cfg: TrainConfig, loss_fn: LossFn) -> tuple[Model, TrainHistory]:
    """Shared epoch loop.  ``loss_fn`` returns ``(loss, logits_for_accuracy)``."""
    idx = dataset.split_indices("train")
    if len(idx) == 0:
        raise DataError("train split is empty")
    if dataset.class_count != model.class_count:
        raise ConfigError(f"dataset has {dataset.class_count} classes but model outputs {model.class_count}")
    steps_per_epoch = -(-len(idx) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    model.rng = np.random.default_rng([cfg.seed, 1])
    history = TrainHistory()
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        loss_sum, correct, seen = 0.0, 0, 0
        lr = cfg.lr0
        for xb, yb, rows in batches(dataset, "train", cfg.batch_size, shuffle_seed=cfg.seed * 100_003 + epoch,
                                    with_indices=True):
            lr = linear_decay(cfg.lr0, step, total)
            model.train()
            try:
                with T.Tape(retain_grads=False) as tape:
                    loss, logits = loss_fn(model, xb.data, yb, rows, step)
            except NumericError as exc:
                model.eval()
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}: {exc}") from None
            value = float(loss.data)
            if not np.isfinite(value):
                model.eval()
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            T.backward(tape, loss)
            opt.step(lr)
            loss_sum += value * len(yb)
            correct += int((logits[: len(yb)].argmax(axis=1) == yb).sum())
            seen += len(yb)
            step += 1
        history.loss.append(loss_sum / seen)
        history.accuracy.append(correct / seen)
        history.lr.append(lr)
        logger.debug("epoch %d loss %.4f acc %.4f", epoch, history.loss[-1], history.accuracy[-1])
    model.eval()
    history.wall_clock = time.perf_counter() - start
    return model, history


def train(model: Model, dataset: Dataset, cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Cross-entropy training on the train split."""

    def loss_fn(m, x, y, rows, step):
        logits = m(x)
        return T.cross_entropy(logits, y), logits.data

    return _fit(model, dataset, cfg, loss_fn)


def adversarial_batch(model: Model, x: np.ndarray, y: np.ndarray, rows: np.ndarray, spec: AdversarialSpec,
                      step: int) -> np.ndarray:
    """Adversarial counterpart of a batch against the current weights."""
    was_training = model.training
    model.eval()
    cfg = spec.config.replace(seed=spec.config.seed + 1_000_003 * step)
    x_adv = attacks.ATTACKS[spec.attack](model, x, y, cfg, indices=rows).x_adv
    model.training = was_training
    return x_adv


def adversarial_train(model: Model, dataset: Dataset, cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Train on adversarial examples generated on the fly.

    ``augment`` optimises the loss over clean plus adversarial inputs;
    ``replace`` uses the adversarial inputs alone.
    """
    spec = cfg.adversarial
    if spec is None:
        raise ConfigError("adversarial_train needs cfg.adversarial")
    attacks.check_name(spec.attack)

    def loss_fn(m, x, y, rows, step):
        x_adv = adversarial_batch(m, x, y, rows, spec, step)
        if spec.mix_mode == "augment":
            xs, ys = np.concatenate([x, x_adv]), np.concatenate([y, y])
        else:
            xs, ys = x_adv, y
        logits = m(xs)
        return T.cross_entropy(logits, ys), logits.data

    return _fit(model, dataset, cfg, loss_fn)


# ---------------------------------------------------------------- distillation


def kd_loss(student_logits: T.Tensor, teacher_logits, labels, kd: KDConfig) -> T.Tensor:
    """alpha·CE(student, labels) + (1 − alpha)·T²·KL(teacher_T ‖ student_T).

    ``teacher_T``/``student_T`` are softmaxes of logits divided by T.  The
    teacher side is constant.
    """
    if kd.temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {kd.temperature}")
    ce = T.cross_entropy(student_logits, labels)
    if kd.alpha == 1.0:
        return ce
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, T.Tensor) else teacher_logits)
    if t.shape != student_logits.shape:
        raise ConfigError(f"teacher logits {t.shape} do not match student logits {student_logits.shape}")
    temp = kd.temperature
    target = T.Tensor(T.stable_log_softmax(t.astype(np.float64) / temp))
    kl = T.kl_divergence(target, student_logits * (1.0 / temp))
    return ce * kd.alpha + kl * ((1.0 - kd.alpha) * temp * temp)


def ensemble_logits(teachers: Sequence[Model], x) -> T.Tensor:
    """Log of the mean member softmax (probabilities, not logits, are averaged)."""
    if not teachers:
        raise ConfigError("ensemble needs at least one teacher")
    k = {t.class_count for t in teachers}
    if len(k) != 1:
        raise ConfigError(f"teachers disagree on class_count: {sorted(k)}")
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    probs = [np.exp(T.stable_log_softmax(t.logits(x).astype(np.float64))) for t in teachers]
    mean = np.mean(probs, axis=0)
    return T.Tensor(np.log(np.maximum(mean, np.finfo(np.float64).tiny)))


@dataclass
class LogitTable:
    """Teacher logits keyed by sample id."""

    ids: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.logits = np.asarray(self.logits, dtype=np.float32)
        if self.logits.ndim != 2 or len(self.logits) != len(self.ids):
            raise FormatError(f"logit table needs [N, K] logits for N ids, got {self.logits.shape}")
        self._rows = {int(s): i for i, s in enumerate(self.ids)}

    @property
    def class_count(self) -> int:
        return self.logits.shape[1]

    def missing(self, sample_ids) -> list[int]:
        return [int(s) for s in sample_ids if int(s) not in self._rows]

    def lookup(self, sample_ids) -> np.ndarray:
        gone = self.missing(sample_ids)
        if gone:
            raise DataError(f"teacher logits missing for sample ids {gone}")
        return self.logits[[self._rows[int(s)] for s in sample_ids]]


LOGIT_MAGIC = b"ALTL"
LOGIT_VERSION = 1


def export_teacher_logits(table: LogitTable, path) -> None:
    n, k = table.logits.shape
    out = bytearray(LOGIT_MAGIC) + struct.pack("<IQI", LOGIT_VERSION, n, k)
    rec = np.zeros(n, dtype=[("id", "<u8"), ("logits", "<f4", (k,))])
    rec["id"] = table.ids
    rec["logits"] = table.logits
    out += rec.tobytes()
    Path(path).write_bytes(with_crc(out))


def import_teacher_logits(path, class_count: Optional[int] = None) -> LogitTable:
    buf = Path(path).read_bytes()
    if buf[:4] != LOGIT_MAGIC:
        raise FormatError(f"teacher logits: bad magic {buf[:4]!r}")
    r = Reader(check_crc(buf, "teacher logits"), "teacher logits")
    r.take(4)
    version, n, k = r.unpack("<IQI")
    if version != LOGIT_VERSION:
        raise FormatError(f"teacher logits: unsupported version {version}")
    if class_count is not None and k != class_count:
        raise FormatError(f"teacher logits have K={k} classes, expected {class_count}")
    dt = np.dtype([("id", "<u8"), ("logits", "<f4", (k,))])
    rec = np.frombuffer(r.take(dt.itemsize * n), dtype=dt)
    r.expect_end()
    return LogitTable(rec["id"].astype(np.int64), rec["logits"].astype(np.float32))


def teacher_logit_table(teachers: Sequence[Model], dataset: Dataset, split: Optional[str] = "train") -> LogitTable:
    """Ensemble logits for every sample of ``split`` (all samples if None)."""
    rows = np.arange(len(dataset)) if split is None else dataset.split_indices(split)
    x, _ = dataset.arrays(split)
    return LogitTable(dataset.ids[rows], ensemble_logits(teachers, x).data)


TeacherSource = Union[Model, Sequence[Model], LogitTable]


class _TeacherCache:
    """Lazily computed, id-keyed teacher logits (teachers are frozen)."""

    def __init__(self, source: TeacherSource, dataset: Dataset):
        self.dataset = dataset
        if isinstance(source, LogitTable):
            if source.class_count != dataset.class_count:
                raise DataError(f"teacher logits have {source.class_count} classes, dataset has "
                                f"{dataset.class_count}")
            gone = source.missing(dataset.ids[dataset.split_indices("train")])
            if gone:
                raise DataError(f"teacher logit file is missing training samples: ids {gone}")
            self.table, self.teachers = source, None
        else:
            self.teachers = [source] if isinstance(source, Model) else list(source)
            for t in self.teachers:
                if t.class_count != dataset.class_count:
                    raise ConfigError(f"teacher {t.name} has {t.class_count} classes, dataset has "
                                      f"{dataset.class_count}")
                t.eval()
            self.table = None
            self.cache: dict[int, np.ndarray] = {}

    def get(self, rows: np.ndarray, x: np.ndarray) -> np.ndarray:
        ids = self.dataset.ids[rows]
        if self.table is not None:
            return self.table.lookup(ids)
        todo = [i for i, s in enumerate(ids) if int(s) not in self.cache]
        if todo:
            fresh = ensemble_logits(self.teachers, x[todo]).data
            for i, row in zip(todo, fresh):
                self.cache[int(ids[i])] = row
        return np.stack([self.cache[int(s)] for s in ids])


def distill(student: Model, teacher_source: TeacherSource, dataset: Dataset, cfg: TrainConfig,
            kd: KDConfig) -> tuple[Model, TrainHistory]:
    """Train ``student`` against frozen teacher(s) or an imported logit table."""
    teachers = _TeacherCache(teacher_source, dataset)

    def loss_fn(m, x, y, rows, step):
        logits = m(x)
        t = None if kd.alpha == 1.0 else teachers.get(rows, x)
        return kd_loss(logits, t, y, kd), logits.data

    return _fit(student, dataset, cfg, loss_fn)
