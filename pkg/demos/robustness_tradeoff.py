"""Regular vs BIM adversarial training, each tested on clean and attacked inputs.

    python demos/robustness_tradeoff.py

The adversarially trained model usually gives up a little clean accuracy for
a large gain under attack.  Expect about 5 minutes on one core.
"""
from advleaf import attacks, data, eval as ev, nn
from advleaf.train import TrainConfig

ds = data.split(data.generate_synthetic(data.SynthConfig(samples_per_class=300)), seed=0)


def build(seed):
    return nn.build_paper_cnn(ds.class_count, ds.image_shape, seed=seed, channels=(16, 32, 64, 128))


report = ev.four_scenario_eval(TrainConfig(epochs=15, seed=0), attacks.default_config("bim"), ds,
                               attack="bim", build_model=build)

print(f"{'train':<12}{'test':<10}{'acc':>7}{'macro-F1':>10}")
for c in report.cells:
    print(f"{c.train:<12}{c.test:<10}{100 * c.accuracy:7.2f}{100 * c.macro_f1:10.2f}")

with open("scenarios.json", "w") as fh:
    fh.write(report.to_json())
print("\nconfig hash", report.config_hash[:12], "-> scenarios.json")
