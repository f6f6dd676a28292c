"""Train a small leaf classifier and watch eight L-inf attacks take it apart.

Run from the repository root:  python demos/attack_gallery.py
Takes about a minute on one core.
"""
import time

import numpy as np

from advleaf import attacks, data, nn, train

# 8 synthetic leaf classes, 32x32, stratified 80/10/10
ds = data.split(data.generate_synthetic(data.SynthConfig()), seed=0)
print(f"{len(ds)} images, classes: {', '.join(ds.class_names)}")

# a half-width version of the four-block CNN is plenty for this data
model = nn.build_paper_cnn(ds.class_count, ds.image_shape, seed=0, channels=(16, 32, 64, 128))
model, hist = train.train(model, ds, train.TrainConfig(epochs=15, seed=0))
print("train accuracy per epoch:", np.round(hist.accuracy, 3))

x, y = ds.arrays("test")
rows = ds.split_indices("test")
clean = (model.predict(x) == y).mean()
print(f"\nclean test accuracy {100 * clean:.1f}%  (eps = 8/255 for every attack)\n")

for name in attacks.ATTACK_NAMES:
    cfg = attacks.default_config(name)
    t0 = time.perf_counter()
    adv = attacks.run_attack(name, model, x, y, cfg, indices=rows)
    acc = (model.predict(adv.x_adv) == y).mean()
    linf = np.abs(adv.x_adv - x).max()
    print(f"{name:<8} acc {100 * acc:5.1f}%  drop {100 * (clean - acc):5.1f} pts  "
          f"max|dx| {linf * 255:4.1f}/255  {time.perf_counter() - t0:4.1f}s")

# the perturbed test set is an ordinary packed dataset
attacks.save_adversarial(attacks.run_attack("pgd", model, x, y, indices=rows), ds, "pgd_test.alds")
print("\nwrote pgd_test.alds")
