"""Gradient attribution maps and exact t-SNE.

Every map is a non-negative [H, W] array divided by its maximum, so values
lie in [0, 1] and a map with no evidence stays all zero.
"""
from __future__ import annotations

import csv
import html
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attacks
from . import tensor as T
from .errors import ConfigError, ShapeError
from .netpbm import encode_pgm, encode_ppm
from .nn import Model, frozen

METHODS = ("saliency", "guided_backprop", "gradcam", "hirescam", "guided_gradcam")


@dataclass
class SaliencyMap:
    values: np.ndarray
    target_class: int
    method: str
    sample_id: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class Embedding2D:
    points: np.ndarray
    labels: np.ndarray
    kl: float
    iterations: int
    kl_history: list = field(default_factory=list)
    entropy_error: float = 0.0


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Divide by the maximum; an all-zero (or empty-evidence) map stays zero."""
    m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    top = m.max(initial=0.0)
    return m / top if top > 0 else np.zeros_like(m)


def _single(model: Model, x, target_class: int) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or len(x) != 1:
        raise ShapeError(f"attribution expects one image [C, H, W], got {x.shape}")
    if not 0 <= int(target_class) < model.class_count:
        raise ConfigError(f"target_class {target_class} outside [0, {model.class_count})")
    return x


def _input_grad(model: Model, x: np.ndarray, target_class: int, guided: bool) -> np.ndarray:
    with frozen(model), T.Tape(guided_relu=guided, retain_grads=False) as tape:
        xt = T.Tensor(x, requires_grad=True)
        score = T.pick(model(xt), [target_class]).sum()
    T.backward(tape, score)
    return xt.grad[0] if xt.grad is not None else np.zeros(x.shape[1:], x.dtype)


def vanilla_saliency(model: Model, x, target_class: int, sample_id=None) -> SaliencyMap:
    """Channel-wise maximum of |∂ logit / ∂ x|."""
    x = _single(model, x, target_class)
    g = _input_grad(model, x, target_class, guided=False)
    return SaliencyMap(normalize_map(np.abs(g).max(axis=0)), int(target_class), "saliency", sample_id)


def guided_backprop(model: Model, x, target_class: int, sample_id=None) -> SaliencyMap:
    """Saliency with ReLUs passing only positive gradient at positive inputs."""
    x = _single(model, x, target_class)
    g = _input_grad(model, x, target_class, guided=True)
    return SaliencyMap(normalize_map(np.abs(g).max(axis=0)), int(target_class), "guided_backprop", sample_id)


def cam_layers(model: Model) -> list[str]:
    """Layers with a spatial [C, H, W] output, usable as CAM targets."""
    names = []
    for layer in model.layers:
        if layer.kind in ("flatten", "linear"):
            break
        if layer.kind != "dropout":
            names.append(layer.name)
    return names


def _resolve_layer(model: Model, layer_name: Optional[str]) -> str:
    valid = cam_layers(model)
    if layer_name is None:
        convs = [n for n in model.conv_layer_names() if n in valid]
        if not convs:
            raise ConfigError("model has no convolutional layer for a class activation map")
        return convs[-1]
    if layer_name not in valid:
        raise ConfigError(f"unknown layer {layer_name!r}; valid layers: {', '.join(valid)}")
    return layer_name


def layer_gradient(model: Model, x, target_class: int, layer_name: Optional[str] = None):
    """Activation A [C, h, w] of ``layer_name`` and ∂logit[target] / ∂A."""
    x = _single(model, x, target_class)
    layer_name = _resolve_layer(model, layer_name)
    with frozen(model), T.Tape() as tape:
        xt = T.Tensor(x, requires_grad=True)
        logits, acts = model.forward(xt, capture=True)
        score = T.pick(logits, [target_class]).sum()
    T.backward(tape, score)
    a = acts[layer_name]
    grad = a.grad if a.grad is not None else np.zeros_like(a.data)
    return a.data[0].astype(np.float64), grad[0].astype(np.float64), layer_name


def upsample_bilinear(m: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize with half-pixel centres (edges clamp, corners not aligned)."""
    m = np.asarray(m, dtype=np.float64)
    (h, w), (H, W) = m.shape, size

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, H)
    c0, c1, fc = axis(w, W)
    top = m[r0][:, c0] * (1 - fc) + m[r0][:, c1] * fc
    bottom = m[r1][:, c0] * (1 - fc) + m[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def _cam(model, x, target_class, layer_name, method, sample_id, weigh) -> SaliencyMap:
    a, g, layer = layer_gradient(model, x, target_class, layer_name)
    raw = np.maximum(weigh(a, g).sum(axis=0), 0.0)
    up = upsample_bilinear(raw, model.input_shape[1:])
    meta = {"layer": layer, "upsampling": "bilinear, half-pixel centres"}
    return SaliencyMap(normalize_map(up), int(target_class), method, sample_id, meta)


def gradcam(model: Model, x, target_class: int, layer_name: Optional[str] = None, sample_id=None) -> SaliencyMap:
    """ReLU(Σ_c w_c·A_c) with w_c the spatial mean of ∂logit/∂A_c."""
    return _cam(model, x, target_class, layer_name, "gradcam", sample_id,
                lambda a, g: g.mean(axis=(1, 2), keepdims=True) * a)


def hirescam(model: Model, x, target_class: int, layer_name: Optional[str] = None, sample_id=None) -> SaliencyMap:
    """ReLU(Σ_c ∂logit/∂A_c ⊙ A_c): no spatial averaging of the gradient."""
    return _cam(model, x, target_class, layer_name, "hirescam", sample_id, lambda a, g: g * a)


def guided_gradcam(model: Model, x, target_class: int, layer_name: Optional[str] = None,
                   sample_id=None) -> SaliencyMap:
    """Guided backpropagation map gated by the upsampled GradCAM map."""
    guided = guided_backprop(model, x, target_class)
    cam = gradcam(model, x, target_class, layer_name)
    return SaliencyMap(normalize_map(guided.values * cam.values), int(target_class), "guided_gradcam",
                       sample_id, cam.metadata)


def attribution(method: str, model: Model, x, target_class: int, layer_name: Optional[str] = None,
                sample_id=None) -> SaliencyMap:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    if method == "saliency":
        return vanilla_saliency(model, x, target_class, sample_id)
    if method == "guided_backprop":
        return guided_backprop(model, x, target_class, sample_id)
    fn = {"gradcam": gradcam, "hirescam": hirescam, "guided_gradcam": guided_gradcam}[method]
    return fn(model, x, target_class, layer_name, sample_id)


def map_difference(a: SaliencyMap, b: SaliencyMap) -> float:
    """Mean absolute per-pixel difference between two maps."""
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a.values - b.values).mean())


def focus_shift(model: Model, x, label: int, method: str = "gradcam", layer_name: Optional[str] = None,
                cfg: Optional[attacks.AttackConfig] = None, sample_index: int = 0) -> dict:
    """How far an FGSM perturbation moves the attribution map of the true class."""
    x = _single(model, x, label)
    cfg = cfg or attacks.default_config("fgsm")
    x_adv = attacks.fgsm(model, x, [label], cfg, indices=[sample_index]).x_adv
    clean = attribution(method, model, x, label, layer_name)
    attacked = attribution(method, model, x_adv, label, layer_name)
    return {"method": method, "attack": "fgsm", "epsilon": cfg.epsilon,
            "mean_abs_difference": map_difference(clean, attacked),
            "clean_prediction": int(model.predict(x)[0]), "attacked_prediction": int(model.predict(x_adv)[0])}


# ---------------------------------------------------------------- heatmap export


def jet(v: np.ndarray) -> np.ndarray:
    """Jet colormap, [...] in [0, 1] -> [..., 3] RGB in [0, 1]."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)[..., None]
    centres = np.array([0.75, 0.5, 0.25])
    return np.clip(1.5 - np.abs(4.0 * v - 4.0 * centres), 0.0, 1.0)


def overlay(smap: SaliencyMap, image) -> np.ndarray:
    """u8 [3, H, W]: 0.5·grayscale(image) + 0.5·jet(map)."""
    img = np.asarray(image.data if isinstance(image, T.Tensor) else image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    if img.shape[1:] != smap.shape:
        raise ShapeError(f"map {smap.shape} does not match image {img.shape}")
    if img.shape[0] == 3:
        gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    else:
        gray = img.mean(axis=0)
    blend = 0.5 * gray[..., None] + 0.5 * jet(smap.values)
    return np.round(np.clip(blend, 0, 1) * 255).astype(np.uint8).transpose(2, 0, 1)


def quantize_map(smap: SaliencyMap) -> np.ndarray:
    return np.round(np.clip(smap.values, 0, 1) * 255).astype(np.uint8)


def export_heatmap(smap: SaliencyMap, x, mode: str, path) -> Path:
    """``raw`` writes the map as PGM, ``overlay`` a PPM blended over the image."""
    path = Path(path)
    if mode == "raw":
        path.write_bytes(encode_pgm(quantize_map(smap)))
    elif mode == "overlay":
        path.write_bytes(encode_ppm(overlay(smap, x)))
    else:
        raise ConfigError(f"unknown heatmap mode {mode!r}; use 'raw' or 'overlay'")
    return path


# ---------------------------------------------------------------- t-SNE


def _entropy_and_probs(d_row: np.ndarray, beta: float):
    p = np.exp(-(d_row - d_row.min()) * beta)
    s = p.sum()
    p /= s
    # Shannon entropy in nats of the conditional distribution
    h = -np.sum(p * np.log(np.maximum(p, 1e-300)))
    return h, p


def conditional_affinities(features: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Row-conditional Gaussian affinities with per-row precision from bisection.

    Returns ``(P, entropies)``; every entropy matches ln(perplexity) to ``tol``
    unless bisection runs out of iterations.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    sq = (x * x).sum(axis=1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    ent = np.zeros(n)
    for i in range(n):
        row = np.delete(d[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            h, p = _entropy_and_probs(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        ent[i] = h
        P[i, np.arange(n) != i] = p
    return P, ent


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne_embed(features, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0, labels=None,
               learning_rate: float = 200.0, exaggeration: float = 12.0,
               exaggeration_iters: int = 250, momentum_switch: int = 250) -> Embedding2D:
    """Exact O(N²) t-SNE with early exaggeration, momentum and per-coordinate gains."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ConfigError(f"t-SNE needs an [N, D] feature matrix with D >= 2, got {x.shape}")
    n = len(x)
    if n < 5 * perplexity:
        raise ConfigError(f"t-SNE needs N >= 5·perplexity; N={n}, perplexity={perplexity}")
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    labels = np.zeros(n, np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} points")

    Pc, ent = conditional_affinities(x, perplexity)
    P = (Pc + Pc.T) / (2 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        mom = 0.5 if it < momentum_switch else 0.8
        sq = (y * y).sum(axis=1)
        num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * y @ y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = mom * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        history.append(_kl(P, Q))
    if not np.isfinite(y).all():
        raise ConfigError("t-SNE diverged; lower the learning rate")
    err = float(np.abs(ent - np.log(perplexity)).max())
    return Embedding2D(y, labels, history[-1], iterations, history, err)


def export_embedding_csv(emb: Embedding2D, path, class_names: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "label", "class_name"])
        for (px, py), lab in zip(emb.points, emb.labels):
            name = class_names[lab] if class_names is not None else str(lab)
            w.writerow([repr(float(px)), repr(float(py)), int(lab), name])
    return path


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf"]


def export_embedding_svg(emb: Embedding2D, path, class_names: Optional[Sequence[str]] = None,
                         size: int = 600, title: str = "") -> Path:
    """Standalone SVG scatter plot, one colour per class, with a legend."""
    pts = emb.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    margin = 40
    xy = margin + (pts - lo) / span * (size - 2 * margin)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size}" '
           f'viewBox="0 0 {size + 160} {size}">',
           f'<rect width="100%" height="100%" fill="white"/>']
    if title:
        out.append(f'<text x="{margin}" y="24" font-family="sans-serif" font-size="14">{html.escape(title)}</text>')
    for (px, py), lab in zip(xy, emb.labels):
        colour = _PALETTE[int(lab) % len(_PALETTE)]
        out.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="3" fill="{colour}" fill-opacity="0.8" '
                   f'class="c{int(lab)}"/>')
    for k, lab in enumerate(np.unique(emb.labels)):
        colour = _PALETTE[int(lab) % len(_PALETTE)]
        name = class_names[lab] if class_names is not None else str(lab)
        y0 = margin + 18 * k
        out.append(f'<circle cx="{size + 10}" cy="{y0}" r="5" fill="{colour}"/>')
        out.append(f'<text x="{size + 20}" y="{y0 + 4}" font-family="sans-serif" font-size="12">'
                   f'{html.escape(str(name))}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path
