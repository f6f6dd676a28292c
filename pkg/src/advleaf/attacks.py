"""Gradient-based L∞ adversarial example generators.

All eight attacks share one contract: ``attack(model, x, y, cfg)`` returns an
:class:`AdversarialBatch` whose images stay inside the ε-ball around ``x``
and inside ``[valid_min, valid_max]``.  Random starts draw from one RNG
stream per sample, keyed by ``(cfg.seed, sample index)``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .nn import Model, frozen

ATTACK_NAMES = ("fgsm", "rfgsm", "ffgsm", "mifgsm", "bim", "pgd", "tpgd", "eotpgd")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    mu: float = 1.0
    eot_samples: int = 10
    random_start: bool = True
    noise_sigma: float = 0.001
    valid_min: float = 0.0
    valid_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.eot_samples < 1:
            raise ConfigError(f"eot_samples must be >= 1, got {self.eot_samples}")
        if self.valid_min > self.valid_max:
            raise ConfigError(f"valid range [{self.valid_min}, {self.valid_max}] is empty")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_config(name: str, **overrides) -> AttackConfig:
    """Conventional settings per attack.

    FFGSM takes a single step from a uniform random start, so it uses the
    larger step α = 1.25·ε of its originating method; the rest share α = 2/255.
    """
    check_name(name)
    base = AttackConfig()
    if name == "ffgsm":
        base = base.replace(alpha=1.25 * base.epsilon)
    return base.replace(**overrides)


def check_name(name: str) -> str:
    if name not in ATTACK_NAMES:
        raise ConfigError(f"unknown attack {name!r}; valid attacks: {', '.join(ATTACK_NAMES)}")
    return name


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    indices: np.ndarray
    attack: str
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x_adv)


# ---------------------------------------------------------------- shared machinery


def project_and_clamp(x_candidate, x_origin, cfg: AttackConfig) -> np.ndarray:
    """Clamp into the ε-ball around ``x_origin``, then into the valid range."""
    xc = np.asarray(x_candidate, dtype=np.float32)
    xo = np.asarray(x_origin, dtype=np.float32)
    if xc.shape != xo.shape:
        raise ShapeError(f"candidate shape {xc.shape} != origin shape {xo.shape}")
    eps = np.float32(cfg.epsilon)
    out = np.clip(xc, xo - eps, xo + eps)
    return np.clip(out, np.float32(cfg.valid_min), np.float32(cfg.valid_max))


def _sample_rngs(cfg: AttackConfig, indices: np.ndarray) -> list[np.random.Generator]:
    return [np.random.default_rng([cfg.seed, int(i)]) for i in indices]


def _per_sample(rngs, shape, draw: Callable[[np.random.Generator, tuple], np.ndarray]) -> np.ndarray:
    return np.stack([draw(r, shape) for r in rngs]).astype(np.float32)


def input_gradient(model: Model, x: np.ndarray, y=None, target_logp: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """∇ₓ of the summed cross-entropy, or of KL(target ‖ f(x)) if a target is given.

    Summation keeps each sample's gradient independent of the batch size.
    """
    with T.Tape(retain_grads=False) as tape:
        xt = T.Tensor(x, requires_grad=True)
        logits = model.forward(xt, rng=rng)
        if target_logp is None:
            loss = T.cross_entropy(logits, y, reduction="sum")
        else:
            loss = T.kl_divergence(T.Tensor(target_logp), logits, reduction="sum")
    T.backward(tape, loss)
    g = xt.grad
    if g is None:
        return np.zeros_like(x, dtype=np.float32)
    bad = ~np.isfinite(g.reshape(len(g), -1)).all(axis=1)
    if bad.any():
        raise NumericError(f"non-finite input gradient for batch index {int(np.flatnonzero(bad)[0])}")
    return g


def expected_input_gradient(model: Model, x: np.ndarray, y, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``samples`` input gradients over stochastic forward passes."""
    if not model.has_stochastic_layers():
        # every pass is identical, so the mean is a single gradient
        return _grad(model, x, y)
    total = np.zeros_like(x, dtype=np.float32)
    with frozen(model, training=True):
        for _ in range(samples):
            total += input_gradient(model, x, y, rng=rng)
    return total / np.float32(samples)


def _prepare(x, y, indices):
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or len(y) != len(x):
        raise ShapeError(f"expected [N, C, H, W] images with N labels, got {x.shape} and {y.shape}")
    indices = np.arange(len(x)) if indices is None else np.asarray(indices, dtype=np.int64)
    return x, y, indices


def _result(name, x_adv, indices, cfg) -> AdversarialBatch:
    return AdversarialBatch(x_adv.astype(np.float32), indices, name, cfg.to_dict())


def _grad(model, x, y):
    with frozen(model, training=False):
        return input_gradient(model, x, y)


def _iterate(model, x, y, start, cfg, steps, step_size, grad_fn=None) -> np.ndarray:
    """Sign-gradient ascent from ``start`` with projection after every step."""
    step = np.float32(step_size)
    xa = start
    for t in range(steps):
        g = _grad(model, xa, y) if grad_fn is None else grad_fn(xa, t)
        xa = project_and_clamp(xa + step * np.sign(g), x, cfg)
    return xa


def _uniform_start(x, cfg, indices):
    eps = cfg.epsilon
    noise = _per_sample(_sample_rngs(cfg, indices), x.shape[1:], lambda r, s: r.uniform(-eps, eps, s))
    return project_and_clamp(x + noise, x, cfg)


# ---------------------------------------------------------------- the eight attacks


def fgsm(model: Model, x, y, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """Single step of size ε along the loss-gradient sign."""
    cfg = cfg or default_config("fgsm")
    x, y, indices = _prepare(x, y, indices)
    g = _grad(model, x, y)
    x_adv = np.clip(x + np.float32(cfg.epsilon) * np.sign(g), np.float32(cfg.valid_min), np.float32(cfg.valid_max))
    return _result("fgsm", project_and_clamp(x_adv, x, cfg), indices, cfg)


def rfgsm(model: Model, x, y, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """Gaussian-sign start of size α, then steps of ε − α with clipping."""
    cfg = cfg or default_config("rfgsm")
    if cfg.alpha > cfg.epsilon:
        raise ConfigError(f"rfgsm needs alpha <= epsilon, got alpha={cfg.alpha}, epsilon={cfg.epsilon}")
    x, y, indices = _prepare(x, y, indices)
    signs = np.sign(_per_sample(_sample_rngs(cfg, indices), x.shape[1:], lambda r, s: r.standard_normal(s)))
    start = project_and_clamp(x + np.float32(cfg.alpha) * signs, x, cfg)
    x_adv = _iterate(model, x, y, start, cfg, cfg.steps, np.float32(cfg.epsilon) - np.float32(cfg.alpha))
    return _result("rfgsm", x_adv, indices, cfg)


def ffgsm(model: Model, x, y, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """Uniform random start inside the ball, then one α-sized sign step."""
    cfg = cfg or default_config("ffgsm")
    x, y, indices = _prepare(x, y, indices)
    start = _uniform_start(x, cfg, indices)
    x_adv = _iterate(model, x, y, start, cfg, 1, cfg.alpha)
    return _result("ffgsm", x_adv, indices, cfg)


def mifgsm(model: Model, x, y, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """Sign steps along a decayed sum of L1-normalised gradients."""
    cfg = cfg or default_config("mifgsm")
    x, y, indices = _prepare(x, y, indices)
    mu = np.float32(cfg.mu)
    momentum = np.zeros_like(x)

    def grad_fn(xa, t):
        nonlocal momentum
        g = _grad(model, xa, y)
        norm = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape(-1, 1, 1, 1)
        # a zero gradient contributes nothing rather than dividing by zero
        unit = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        momentum = mu * momentum + unit
        return momentum

    x_adv = _iterate(model, x, y, x.copy(), cfg, cfg.steps, cfg.alpha, grad_fn)
    return _result("mifgsm", x_adv, indices, cfg)


def bim(model: Model, x, y, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """Iterative α-sized sign steps from x, clipped to the ball each time."""
    cfg = cfg or default_config("bim")
    x, y, indices = _prepare(x, y, indices)
    x_adv = _iterate(model, x, y, x.copy(), cfg, cfg.steps, cfg.alpha)
    return _result("bim", x_adv, indices, cfg)


def pgd(model: Model, x, y, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """BIM from a uniform random start (unless ``random_start`` is off)."""
    cfg = cfg or default_config("pgd")
    x, y, indices = _prepare(x, y, indices)
    start = _uniform_start(x, cfg, indices) if cfg.random_start else x.copy()
    x_adv = _iterate(model, x, y, start, cfg, cfg.steps, cfg.alpha)
    return _result("pgd", x_adv, indices, cfg)


def tpgd(model: Model, x, y=None, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """Ascend KL(f(x) ‖ f(x′)) from a small Gaussian start; labels are unused."""
    cfg = cfg or default_config("tpgd")
    x, _, indices = _prepare(x, np.zeros(len(x), np.int64) if y is None else y, indices)
    with frozen(model, training=False):
        target = T.stable_log_softmax(model.forward(x).data)
    noise = _per_sample(_sample_rngs(cfg, indices), x.shape[1:], lambda r, s: r.standard_normal(s))
    start = project_and_clamp(x + np.float32(cfg.noise_sigma) * noise, x, cfg)

    def grad_fn(xa, t):
        with frozen(model, training=False):
            return input_gradient(model, xa, target_logp=target)

    x_adv = _iterate(model, x, None, start, cfg, cfg.steps, cfg.alpha, grad_fn)
    return _result("tpgd", x_adv, indices, cfg)


def eotpgd(model: Model, x, y, cfg: AttackConfig = None, indices=None) -> AdversarialBatch:
    """PGD whose step direction averages gradients over stochastic passes.

    Dropout stays active while sampling, so the average realises the
    expectation over the model's randomness.
    """
    cfg = cfg or default_config("eotpgd")
    x, y, indices = _prepare(x, y, indices)
    start = _uniform_start(x, cfg, indices) if cfg.random_start else x.copy()

    def grad_fn(xa, t):
        rng = np.random.default_rng([cfg.seed, 0xE07, t])
        return expected_input_gradient(model, xa, y, cfg.eot_samples, rng)

    x_adv = _iterate(model, x, y, start, cfg, cfg.steps, cfg.alpha, grad_fn)
    return _result("eotpgd", x_adv, indices, cfg)


ATTACKS: dict[str, Callable[..., AdversarialBatch]] = {
    "fgsm": fgsm, "rfgsm": rfgsm, "ffgsm": ffgsm, "mifgsm": mifgsm,
    "bim": bim, "pgd": pgd, "tpgd": tpgd, "eotpgd": eotpgd,
}


def run_attack(name: str, model: Model, x, y, cfg: AttackConfig = None, indices=None,
               batch_size: int = 256) -> AdversarialBatch:
    """Dispatch by name, processing the input in chunks of ``batch_size``."""
    fn = ATTACKS[check_name(name)]
    cfg = cfg or default_config(name)
    x, y, indices = _prepare(x, y, indices)
    parts = [fn(model, x[i:i + batch_size], y[i:i + batch_size], cfg, indices[i:i + batch_size]).x_adv
             for i in range(0, len(x), batch_size)]
    x_adv = np.concatenate(parts) if parts else x.copy()
    return AdversarialBatch(x_adv, indices, name, cfg.to_dict())


def save_adversarial(batch: AdversarialBatch, dataset, path, labels=None, metadata: Optional[dict] = None) -> Path:
    """Write the batch as a packed dataset plus a ``.json`` sidecar.

    Images are quantised to 8 bits; for an origin on the 8-bit grid and ε a
    multiple of 1/255 the quantised images stay inside the ball.
    """
    from .data import Dataset, save_packed, to_uint8

    rows = np.asarray(batch.indices, dtype=np.int64)
    labels = dataset.labels[rows] if labels is None else np.asarray(labels)
    adv = Dataset(to_uint8(batch.x_adv), labels, dataset.ids[rows], list(dataset.class_names),
                  {"test": np.arange(len(rows))},
                  metadata={"attack": batch.attack, "attack_config": batch.config})
    path = Path(path)
    save_packed(adv, path)
    sidecar = path.with_name(path.name + ".json")
    info = {"attack": batch.attack, "config": batch.config, "source_rows": rows.tolist(),
            "source_ids": dataset.ids[rows].tolist(), **(metadata or {})}
    sidecar.write_text(json.dumps(info, indent=2, sort_keys=True))
    return sidecar
