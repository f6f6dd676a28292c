"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line verdict that the terminal summary prints (see
conftest.py).  The directional training checks (4 to 6) run on the desk-scale
synthetic set and take several minutes each.
"""
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from advleaf import attacks, data, eval as ev, explain, netpbm, nn, train
from advleaf import tensor as T
from advleaf.errors import AdvLeafError, FormatError

from conftest import ACCEPTANCE
from gradcheck import check_fd, grad_of
from oracles import central_difference, macro_f1_brute, rel_err

FIXTURES = Path(__file__).parent / "fixtures"

# desk-scale settings for the directional checks (4 to 6); see README
SYNTH_SEED = 0
ROBUST_CHANNELS = (16, 32, 64, 128)
ROBUST_EPOCHS = 15
ROBUST_SAMPLES = 300
# a noisier, smaller set so the student does not saturate and the teacher has something to teach
DISTILL_SAMPLES = 60
DISTILL_NOISE = 45.0
DISTILL_EPOCHS = 40


@contextmanager
def criterion(number, title, budget=None):
    """Record pass/fail and wall time for one criterion; re-raises failures."""
    t0 = time.perf_counter()
    note = {"detail": ""}
    try:
        yield note
        seconds = time.perf_counter() - t0
        if budget is not None:
            assert seconds < budget, f"runtime {seconds:.0f}s exceeds {budget}s"
    except BaseException as exc:
        ACCEPTANCE[number] = (title, False, time.perf_counter() - t0, f"{note['detail']} | {exc}".strip(" |"))
        raise
    ACCEPTANCE[number] = (title, True, seconds, note["detail"])


def tiny_cnn(seed=0, classes=3):
    return nn.build_paper_cnn(classes, (3, 16, 16), seed=seed, channels=(4, 6, 6, 8), hidden=8)


def linear_region(model, x):
    """ReLU on/off pattern and max-pool winners: the piecewise-linear region of ``x``."""
    _, acts = model.forward(T.Tensor(x), capture=True)
    bits, prev = [], T.Tensor(x)
    for layer in model.layers:
        out = acts[layer.name]
        if layer.kind == "relu":
            bits.append((out.data > 0).ravel())
        elif layer.kind == "maxpool":
            n, c, h, w = prev.shape
            k = layer.kernel
            tiles = prev.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k,
                                                                                                       w // k, k * k)
            bits.append(tiles.argmax(-1).ravel())
        prev = out
    return np.concatenate(bits)


# ---------------------------------------------------------------- 1


def test_c01_gradient_integrity():
    rng = np.random.default_rng(11)
    r = lambda *s: rng.normal(size=s)
    with criterion(1, "gradient integrity", budget=120) as note:
        g4, g3, g2 = r(2, 3, 6, 6), r(2, 3, 3, 3), r(2, 5)
        cases = {
            "add": (lambda a, b: ((a + b) * T.Tensor(g2)).sum(), [r(2, 5), r(5)], (0, 1)),
            "mul": (lambda a, b: (a * b).sum(), [r(2, 5), r(2, 5)], (0, 1)),
            "neg": (lambda a: (T.neg(a) * T.Tensor(g2)).sum(), [r(2, 5)], (0,)),
            "reshape": (lambda a: (T.reshape(a, (2, 5)) * T.Tensor(g2)).sum(), [r(10)], (0,)),
            "flatten": (lambda a: (T.flatten(a) * T.Tensor(g2)).sum(), [r(2, 5, 1)], (0,)),
            "pick": (lambda a: T.pick(a, [1, 4]).sum(), [r(2, 5)], (0,)),
            "linear": (lambda a, w, b: (T.linear(a, w, b) * T.Tensor(g2)).sum(), [r(2, 4), r(4, 5), r(5)], (0, 1, 2)),
            "conv2d": (lambda a, w, b: (T.conv2d(a, w, b, 1, 1) * T.Tensor(g4)).sum(), [r(2, 2, 6, 6), r(3, 2, 3, 3), r(3)],
                       (0, 1, 2)),
            "maxpool2d": (lambda a: (T.maxpool2d(a, 2) * T.Tensor(g3)).sum(), [r(2, 3, 6, 6)], (0,)),
            "relu": (lambda a: (T.relu(a) * T.Tensor(g2)).sum(), [r(2, 5)], (0,)),
            "dropout": (lambda a: (T.dropout(a, 0.3, True, np.random.default_rng(5)) * T.Tensor(g2)).sum(), [r(2, 5)],
                        (0,)),
            "softmax": (lambda a: (T.softmax(a) * T.Tensor(g2)).sum(), [r(2, 5)], (0,)),
            "log_softmax": (lambda a: (T.log_softmax(a) * T.Tensor(g2)).sum(), [r(2, 5)], (0,)),
            "cross_entropy": (lambda a: T.cross_entropy(a, [0, 3]), [r(2, 5)], (0,)),
            "kl_divergence": (lambda q: T.kl_divergence(T.Tensor(T.stable_log_softmax(g2)), q), [r(2, 5)], (0,)),
        }
        for name, (fn, arrays, which) in cases.items():
            kink = (lambda a, i: abs(a.flat[i]) < 1e-2) if name == "relu" else None
            for w in which:
                check_fd(fn, arrays, w, coords=20, kink=kink)

        # the full four-block CNN loss, w.r.t. the input and every parameter
        model = tiny_cnn(seed=4).astype(np.float64)
        x = np.random.default_rng(2).random((1, 3, 16, 16))
        y = np.array([1])
        with T.precision(np.float64):
            xt = T.Tensor(x, requires_grad=True)
            with T.Tape() as tape:
                loss = T.cross_entropy(model(xt), y)
            T.backward(tape, loss)
            grads = {"input": xt.grad, **{k: p.grad for k, p in model.params.items()}}
            checked = skipped = 0
            for name, g in grads.items():
                base = x if name == "input" else model.params[name].data

                def run(v, name=name, f=lambda m, xx: T.cross_entropy(m(T.Tensor(xx)), y)):
                    if name == "input":
                        return f(model, v)
                    saved = model.params[name]
                    model.params[name] = T.Tensor(v)
                    try:
                        return f(model, x)
                    finally:
                        model.params[name] = saved

                value = lambda v: float(run(v).data)
                pattern = lambda v: run(v, f=lambda m, xx: linear_region(m, xx))
                done = 0
                for idx in np.random.default_rng(3).permutation(base.size):
                    lo, hi = base.copy(), base.copy()
                    lo.flat[idx] -= 1e-3
                    hi.flat[idx] += 1e-3
                    if not np.array_equal(pattern(lo), pattern(hi)):
                        skipped += 1  # the step crosses a ReLU or max-pool kink
                        continue
                    num = central_difference(value, base, idx, 1e-3)
                    assert rel_err(g.flat[idx], num) < 1e-3, (name, idx, g.flat[idx], num)
                    done += 1
                    if done == min(20, base.size):
                        break
                assert done >= 1, f"{name}: every coordinate crosses a kink"
                checked += done
        assert checked >= 20
        note["detail"] = f"{len(cases)} ops, {checked} CNN coordinates ({skipped} kink crossings skipped)"


# ---------------------------------------------------------------- 2


def test_c02_attack_invariants():
    model = tiny_cnn(seed=1)
    with criterion(2, "attack invariants", budget=120) as note:
        runs = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            x = rng.random((2, 3, 16, 16)).astype(np.float32)
            y = rng.integers(0, 3, 2)
            for name in attacks.ATTACK_NAMES:
                cfg = attacks.default_config(name, steps=2, eot_samples=2, seed=seed)
                a = attacks.run_attack(name, model, x, y, cfg).x_adv
                assert np.abs(a - x).max() <= cfg.epsilon + 1e-6, (name, seed)
                assert a.min() >= cfg.valid_min and a.max() <= cfg.valid_max, (name, seed)
                assert np.array_equal(a, attacks.run_attack(name, model, x, y, cfg).x_adv), (name, seed)
                zero = attacks.default_config(name, epsilon=0.0, alpha=0.0, steps=2, eot_samples=2, seed=seed)
                assert np.array_equal(attacks.run_attack(name, model, x, y, zero).x_adv, x), (name, seed)
                runs += 1
        note["detail"] = f"{runs} attack/seed pairs"


# ---------------------------------------------------------------- 3


def test_c03_reduction_identities():
    model = tiny_cnn(seed=2)
    rng = np.random.default_rng(0)
    x = rng.random((6, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 3, 6)
    eps = 8 / 255
    with criterion(3, "reduction identities") as note:
        diffs = {}
        run = lambda name, **kw: attacks.run_attack(name, model, x, y, attacks.default_config(name, **kw)).x_adv
        diffs["bim1=fgsm"] = np.abs(run("bim", steps=1, alpha=eps, epsilon=eps) - run("fgsm", epsilon=eps)).max()
        diffs["pgd0=bim"] = np.abs(run("pgd", random_start=False) - run("bim")).max()
        diffs["eot1=pgd"] = np.abs(run("eotpgd", eot_samples=1) - run("pgd")).max()
        diffs["mi0=bim(1)"] = np.abs(run("mifgsm", mu=0.0, steps=1) - run("bim", steps=1)).max()
        diffs["mi0=bim"] = np.abs(run("mifgsm", mu=0.0) - run("bim")).max()
        for k, d in diffs.items():
            assert d <= 1e-6, (k, d)
        note["detail"] = "max diff " + f"{max(diffs.values()):.1e}"


# ---------------------------------------------------------------- 4 to 6: directional checks


@pytest.fixture(scope="module")
def synth():
    return data.split(data.generate_synthetic(data.SynthConfig(seed=SYNTH_SEED)), seed=0)


def test_c04_attacks_reduce_accuracy(synth):
    with criterion(4, "attacks reduce accuracy", budget=15 * 60) as note:
        model, _ = train.train(nn.build_paper_cnn(8, (3, 32, 32), seed=0), synth, train.TrainConfig(epochs=10))
        x, y = synth.arrays("test")
        rows = synth.split_indices("test")
        clean = float((model.predict(x) == y).mean())
        drops = {}
        for name in attacks.ATTACK_NAMES:
            adv = attacks.run_attack(name, model, x, y, attacks.default_config(name), indices=rows).x_adv
            drops[name] = 100 * (clean - float((model.predict(adv) == y).mean()))
        note["detail"] = f"clean {100 * clean:.1f}%, min drop {min(drops.values()):.1f} pts"
        assert clean >= 0.90
        assert all(d >= 30 for d in drops.values()), drops


def test_c05_adversarial_training_gains_robustness():
    ds = data.split(data.generate_synthetic(data.SynthConfig(samples_per_class=ROBUST_SAMPLES, seed=SYNTH_SEED)), seed=0)
    build = lambda: nn.build_paper_cnn(8, (3, 32, 32), seed=0, channels=ROBUST_CHANNELS)
    bim = attacks.default_config("bim")
    with criterion(5, "adversarial training trade-off", budget=20 * 60) as note:
        regular, _ = train.train(build(), ds, train.TrainConfig(epochs=ROBUST_EPOCHS))
        spec = train.AdversarialSpec("bim", bim)
        robust, _ = train.adversarial_train(build(), ds, train.TrainConfig(epochs=ROBUST_EPOCHS, adversarial=spec))
        x, y = ds.arrays("test")
        rows = ds.split_indices("test")

        def scores(m):
            adv = attacks.run_attack("bim", m, x, y, bim, indices=rows).x_adv
            return 100 * float((m.predict(x) == y).mean()), 100 * float((m.predict(adv) == y).mean())

        (rc, rr), (ac, ar) = scores(regular), scores(robust)
        note["detail"] = f"regular clean {rc:.2f} bim {rr:.2f}; adversarial clean {ac:.2f} bim {ar:.2f}"
        assert ar - rr >= 20
        assert ac <= rc + 1


def test_c06_distillation_helps_student():
    with criterion(6, "distillation gain", budget=20 * 60) as note:
        ds = data.split(data.generate_synthetic(data.SynthConfig(samples_per_class=DISTILL_SAMPLES, noise=DISTILL_NOISE,
                                                                 seed=SYNTH_SEED)), seed=0)
        x, y = ds.arrays("test")
        acc = lambda m: 100 * float((m.predict(x) == y).mean())
        teacher, _ = train.train(nn.build_teacher(8, (3, 32, 32)), ds, train.TrainConfig(epochs=DISTILL_EPOCHS))
        kd = train.KDConfig(alpha=0.1, temperature=3.0)
        gains, scratch_accs = [], []
        for seed in range(3):
            cfg = train.TrainConfig(epochs=DISTILL_EPOCHS, seed=seed)
            scratch, _ = train.train(nn.build_student(8, (3, 32, 32), seed=seed), ds, cfg)
            distilled, _ = train.distill(nn.build_student(8, (3, 32, 32), seed=seed), teacher, ds, cfg, kd)
            scratch_accs.append(acc(scratch))
            gains.append(acc(distilled) - scratch_accs[-1])
        t = acc(teacher)
        note["detail"] = (f"teacher {t:.2f}, scratch {[round(a, 2) for a in scratch_accs]}, "
                          f"gains {[round(g, 2) for g in gains]}")
        assert np.median(gains) >= 0
        # teacher against the from-scratch student, as in the before-distillation comparison
        assert t >= np.median(scratch_accs)


# ---------------------------------------------------------------- 7


def test_c07_size_arithmetic():
    with criterion(7, "size and FLOP arithmetic") as note:
        rep = ev.size_efficiency_report({"Student": (3.71, 0.48), "ResNet50": (23.66, 10.09)}, reference="Student")
        assert str(rep.row("ResNet50").params_pct) == "15.68"
        assert str(rep.row("ResNet50").flops_pct) == "4.75"

        # hand-derived: params = weights + biases; 2 FLOPs per multiply-add, 1 per ReLU/pool input
        linear = nn.Model([nn.flatten(), nn.dense("fc", 8, 5)], 5, (1, 1, 8))
        assert (nn.count_params(linear), nn.estimate_flops(linear)) == (8 * 5 + 5, 2 * 8 * 5)
        small = nn.Model([nn.conv("c", 3, 4, 3, 1, 0), nn.flatten(), nn.dense("fc", 4, 2)], 2, (3, 3, 3))
        assert nn.count_params(small) == (4 * 27 + 4) + (4 * 2 + 2)
        assert nn.estimate_flops(small) == 2 * 27 * 4 + 2 * 4 * 2
        cnn = nn.build_paper_cnn(39, (3, 32, 32))
        conv_p = (3 * 9 * 32 + 32) + (32 * 9 * 64 + 64) + (64 * 9 * 128 + 128) + (128 * 9 * 256 + 256)
        fc_p = (256 * 4 * 128 + 128) + (128 * 39 + 39)
        assert nn.count_params(cnn) == conv_p + fc_p == 524_647
        conv_f = sum(2 * cin * 9 * cout * s * s for cin, cout, s in ((3, 32, 32), (32, 64, 16), (64, 128, 8),
                                                                     (128, 256, 4)))
        pool_f = 32 * 32 * 32 + 64 * 16 * 16 + 128 * 8 * 8 + 256 * 4 * 4
        relu_f = 32 * 32 * 32 + 64 * 16 * 16 + 128 * 8 * 8 + 256 * 4 * 4 + 128
        fc_f = 2 * 1024 * 128 + 2 * 128 * 39
        assert nn.estimate_flops(cnn) == conv_f + pool_f + relu_f + fc_f
        note["detail"] = "15.68% / 4.75%; three architectures exact"


# ---------------------------------------------------------------- 8


def test_c08_metric_oracles():
    with criterion(8, "metric oracles") as note:
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(1000):
            k = int(rng.integers(1, 11))
            cm = rng.integers(0, 6, (k, k)) * (rng.random((k, k)) < 0.7)
            cm[0, 0] += 1
            worst = max(worst, abs(ev.macro_f1(cm) - macro_f1_brute(cm.tolist())))
            assert ev.accuracy(cm) == np.trace(cm) / cm.sum()
            perm = rng.permutation(k)
            assert abs(ev.macro_f1(cm[np.ix_(perm, perm)]) - ev.macro_f1(cm)) <= 1e-12
        assert worst <= 1e-9
        note["detail"] = f"1000 matrices, worst |diff| {worst:.1e}"


# ---------------------------------------------------------------- 9


def test_c09_explainability_invariants(synth):
    with criterion(9, "explainability invariants") as note:
        model = tiny_cnn(seed=3)
        x = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        for method in explain.METHODS:
            m = explain.attribution(method, model, x, 1)
            assert m.shape == (16, 16) and m.values.min() >= 0 and m.values.max() <= 1

        # no ReLU: guided backprop is plain saliency
        lin = nn.Model([nn.flatten(), nn.dense("fc", 12, 2)], 2, (3, 2, 2), seed=1)
        z = np.random.default_rng(1).random((3, 2, 2)).astype(np.float32)
        assert np.abs(explain.guided_backprop(lin, z, 0).values - explain.vanilla_saliency(lin, z, 0).values).max() \
            <= 1e-6

        # linear head on the raw conv output: constant spatial gradient
        cam = nn.Model([nn.conv("conv1", 3, 2, 1, 1, 0), nn.flatten(), nn.dense("fc", 8, 2)], 2, (3, 2, 2), seed=2)
        w = np.zeros((8, 2), np.float32)
        w[:4, 0], w[4:, 0] = 0.7, -0.2
        cam.params["fc.weight"].data = w
        diff = np.abs(explain.gradcam(cam, z, 0).values - explain.hirescam(cam, z, 0).values).max()
        assert diff <= 1e-6

        # hand-computed toy: conv1 1→2 with weights [1, −1], bias [0, 5]
        toy = nn.Model([nn.conv("conv1", 1, 2, 1, 1, 0), nn.flatten(), nn.dense("fc", 8, 2)], 2, (1, 2, 2))
        toy.params["conv1.weight"].data = np.array([1, -1], np.float32).reshape(2, 1, 1, 1)
        toy.params["conv1.bias"].data = np.array([0, 5], np.float32)
        fw = np.zeros((8, 2), np.float32)
        fw[:, 0] = [1, 1, 1, 1, 0, 0, 0, -2]
        fw[:, 1] = -1
        toy.params["fc.weight"].data = fw
        img = np.array([[[0, 1], [4, 7]]], np.float32) / 7
        got = explain.gradcam(toy, img, 0).values
        # weights (1, −0.5); act1 = img, act2 = 5 − img
        raw = np.maximum(img[0] - 0.5 * (5 - img[0]), 0)
        want = (raw - raw.min()) / (raw.max() - raw.min()) if raw.max() > raw.min() else raw
        assert np.abs(got - want).max() <= 1e-6

        # trained model: FGSM moves the GradCAM map
        trained, _ = train.train(nn.build_paper_cnn(8, (3, 32, 32), seed=0, channels=(8, 16, 32, 32)), synth,
                                 train.TrainConfig(epochs=3))
        xs, ys = synth.arrays("test")
        # a single map can be all-zero before and after, so the shift is averaged over samples
        shifts = [explain.focus_shift(trained, xs[i], int(ys[i]), "gradcam", sample_index=i)["mean_abs_difference"]
                  for i in range(20)]
        assert np.mean(shifts) > 0
        note["detail"] = f"mean focus shift {np.mean(shifts):.3f} over 20 samples"


# ---------------------------------------------------------------- 10


def test_c10_tsne():
    rng = np.random.default_rng(0)
    feats = np.vstack([rng.normal(0, 1, (50, 10)), rng.normal(8, 1, (50, 10))])
    labels = np.r_[np.zeros(50, int), np.ones(50, int)]
    with criterion(10, "t-SNE", budget=60) as note:
        emb = explain.tsne_embed(feats, perplexity=20, seed=0, labels=labels)
        assert emb.entropy_error <= 1e-3
        assert emb.kl_history[-1] < emb.kl_history[299]
        d = ((emb.points[:, None] - emb.points[None]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        nn_acc = float((labels[d.argmin(1)] == labels).mean())
        assert nn_acc >= 0.95
        note["detail"] = f"1-NN {nn_acc:.2f}, entropy err {emb.entropy_error:.1e}, KL {emb.kl:.3f}"


# ---------------------------------------------------------------- 11


def test_c11_format_round_trips(tmp_path):
    with criterion(11, "format round trips") as note:
        model = tiny_cnn(seed=5)
        nn.save_checkpoint(model, tmp_path / "m.alfm", {"k": 1})
        back, meta = nn.load_checkpoint(tmp_path / "m.alfm")
        assert all(np.array_equal(back.params[k].data, model.params[k].data) for k in model.params)
        nn.save_checkpoint(back, tmp_path / "m2.alfm", meta)
        assert (tmp_path / "m.alfm").read_bytes() == (tmp_path / "m2.alfm").read_bytes()
        assert (FIXTURES / "tiny.alfm").read_bytes()[:4] == b"ALFM"
        nn.load_checkpoint(FIXTURES / "tiny.alfm")

        ds = data.load_packed(FIXTURES / "five.alds")
        assert ds.ids.tolist() == [10, 11, 12, 20, 21]
        data.save_packed(ds, tmp_path / "d.alds")
        again = data.load_packed(tmp_path / "d.alds")
        assert np.array_equal(again.images, ds.images) and again.class_names == ds.class_names
        assert again.splits.keys() == ds.splits.keys()

        table = train.import_teacher_logits(FIXTURES / "ten_k39.altl")
        train.export_teacher_logits(table, tmp_path / "t.altl")
        assert (tmp_path / "t.altl").read_bytes() == (FIXTURES / "ten_k39.altl").read_bytes()

        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7), dtype=np.uint8)
        assert np.array_equal(netpbm.read_ppm(netpbm.encode_ppm(img)), img)
        gray = img[0]
        assert np.array_equal(netpbm.read_pgm(netpbm.encode_pgm(gray)), gray)

        bad = {
            "corrupt_magic.alfm": nn.load_checkpoint,
            "corrupt_truncated.alds": data.load_packed,
            "corrupt_crc.altl": train.import_teacher_logits,
            "corrupt_short.ppm": netpbm.read_ppm,
        }
        for name, loader in bad.items():
            with pytest.raises(AdvLeafError) as info:
                loader(FIXTURES / name)
            assert isinstance(info.value, FormatError) and info.value.code == "E_FORMAT", name
            assert info.value.exit_code == 4
        note["detail"] = f"4 formats, {len(bad)} corrupted fixtures rejected"
