"""Heatmaps before and after an FGSM nudge, plus a t-SNE of the learned features.

    python demos/explain_and_embed.py

Writes PGM/PPM heatmaps and an embedding CSV/SVG into ./explain_out/.
"""
from pathlib import Path

import numpy as np

from advleaf import attacks, data, explain, nn, train

out = Path("explain_out")
out.mkdir(exist_ok=True)

ds = data.split(data.generate_synthetic(data.SynthConfig()), seed=0)
model, _ = train.train(nn.build_paper_cnn(ds.class_count, ds.image_shape, channels=(16, 32, 64, 128)), ds,
                       train.TrainConfig(epochs=15))
x, y = ds.arrays("test")

i = 0
label = int(y[i])
x_adv = attacks.fgsm(model, x[i:i + 1], [label]).x_adv[0]
for method in explain.METHODS:
    clean = explain.attribution(method, model, x[i], label)
    attacked = explain.attribution(method, model, x_adv, label)
    explain.export_heatmap(clean, x[i], "overlay", out / f"{method}_clean.ppm")
    explain.export_heatmap(attacked, x_adv, "overlay", out / f"{method}_fgsm.ppm")
    print(f"{method:<16} mean |clean - attacked| = {explain.map_difference(clean, attacked):.3f}")

# penultimate features of the test split, embedded in 2-D
feats = model.features(x)
emb = explain.tsne_embed(feats, perplexity=min(30.0, len(x) / 5), seed=0, labels=y)
explain.export_embedding_csv(emb, out / "tsne.csv", ds.class_names)
explain.export_embedding_svg(emb, out / "tsne.svg", ds.class_names)
print(f"t-SNE KL {emb.kl:.3f}, {len(np.unique(y))} classes -> {out}/tsne.svg")
