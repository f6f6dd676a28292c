"""``advleaf`` command-line front end.

Every subcommand reads a strict JSON run configuration (unknown keys are
rejected), writes its artifacts plus a ``.json`` provenance record, and maps
failures to exit codes: 2 configuration, 3 numeric, 4 input/output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, attacks, data, explain
from . import eval as metrics
from . import nn, train
from .errors import AdvLeafError, ConfigError, FormatError

logger = logging.getLogger("advleaf")

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}


def _section(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "dataset": _section({
            "class_count": {"type": "integer", "minimum": 2},
            "samples_per_class": {"oneOf": [{"type": "integer", "minimum": 0},
                                            {"type": "array", "items": {"type": "integer", "minimum": 0}}]},
            "image_size": {"type": "integer", "minimum": 16},
            "noise": {"type": "number", "minimum": 0},
            "split": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
            "stratified": {"type": "boolean"},
        }),
        "model": _section({
            "architecture": {"enum": ["paper_cnn", "student", "teacher"]},
            "channels": {"type": "array", "items": _POS_INT, "minItems": 1},
            "hidden": _POS_INT,
            "width_multiplier": {"type": "number", "exclusiveMinimum": 0},
            "depth_multiplier": _POS_INT,
            "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        }),
        "train": _section({
            "epochs": _POS_INT,
            "batch_size": _POS_INT,
            "lr0": {"type": "number", "minimum": 0},
            "mix_mode": {"enum": list(train.MIX_MODES)},
            "adversarial_attack": {"enum": [None, *attacks.ATTACK_NAMES]},
        }),
        "attack": _section({
            "name": {"enum": list(attacks.ATTACK_NAMES)},
            "epsilon": {"type": "number", "minimum": 0},
            "alpha": {"type": "number", "minimum": 0},
            "steps": _POS_INT,
            "mu": _NUM,
            "eot_samples": _POS_INT,
            "random_start": {"type": "boolean"},
            "noise_sigma": {"type": "number", "minimum": 0},
            "valid_min": _NUM,
            "valid_max": _NUM,
        }),
        "kd": _section({
            "alpha": {"type": "number", "minimum": 0, "maximum": 1},
            "temperature": {"type": "number", "exclusiveMinimum": 0},
        }),
        "explain": _section({
            "layer": {"type": ["string", "null"]},
            "perplexity": {"type": "number", "exclusiveMinimum": 0},
            "iterations": _POS_INT,
            "attack_epsilon": {"type": "number", "minimum": 0},
        }),
    },
}

DEFAULTS = {
    "dataset": {"class_count": 8, "samples_per_class": 100, "image_size": 32, "noise": 10.0,
                "split": [0.8, 0.1, 0.1], "stratified": True},
    "model": {},
    "train": {"epochs": 30, "batch_size": 32, "lr0": 5e-4, "mix_mode": "augment", "adversarial_attack": None},
    "attack": {"name": "bim"},
    "kd": {"alpha": 0.1, "temperature": 3.0},
    "explain": {"layer": None, "iterations": 1000},
}


# ---------------------------------------------------------------- config


def load_run_config(path: Optional[str]) -> dict:
    """Validate a RunConfig file and merge defaults section by section."""
    if path is None:
        raw = {"seed": 0}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    try:
        jsonschema.validate(raw, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {e.message}") from None
    cfg = {"seed": raw["seed"]}
    for key, defaults in DEFAULTS.items():
        cfg[key] = {**defaults, **raw.get(key, {})}
    return cfg


def attack_config(cfg: dict, name: Optional[str] = None) -> attacks.AttackConfig:
    section = dict(cfg["attack"])
    name = name or section.pop("name")
    section.pop("name", None)
    return attacks.default_config(name, seed=cfg["seed"], **section)


def train_config(cfg: dict, adversarial: Optional[str] = None) -> train.TrainConfig:
    t = cfg["train"]
    name = adversarial or t["adversarial_attack"]
    spec = None
    if name:
        spec = train.AdversarialSpec(attacks.check_name(name), attack_config(cfg, name), t["mix_mode"])
    return train.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr0=t["lr0"], seed=cfg["seed"],
                             adversarial=spec)


def build_model(cfg: dict, dataset: data.Dataset, seed: Optional[int] = None,
                default_arch: str = "paper_cnn") -> nn.Model:
    m = cfg["model"]
    seed = cfg["seed"] if seed is None else seed
    k, shape = dataset.class_count, dataset.image_shape
    arch = m.get("architecture", default_arch)
    if arch == "paper_cnn":
        kw = {key: m[key] for key in ("channels", "hidden") if key in m}
        return nn.build_paper_cnn(k, shape, seed=seed, **kw)
    if arch == "student":
        kw = {"base_channels": m["channels"]} if "channels" in m else {}
        return nn.build_student(k, shape, m.get("width_multiplier", 0.5), seed=seed,
                                dropout_rate=m.get("dropout_rate", 0.5), **kw)
    kw = {key: m[key] for key in ("channels", "hidden") if key in m}
    return nn.build_teacher(k, shape, m.get("depth_multiplier", 2), seed=seed, **kw)


def provenance(cfg: dict) -> dict:
    return metrics.provenance(cfg, cfg["seed"])


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=metrics._json_default) + "\n")
    return path


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _accuracy(model: nn.Model, x, y) -> float:
    return metrics.accuracy(metrics.confusion_from_predictions(y, model.predict(x), model.class_count))


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> dict:
    d = cfg["dataset"]
    synth = data.SynthConfig(d["class_count"], d["samples_per_class"], d["image_size"], cfg["seed"], d["noise"])
    synth.validate()
    ds = data.split(data.generate_synthetic(synth), tuple(d["split"]), seed=cfg["seed"], stratified=d["stratified"])
    ds.metadata["provenance"] = provenance(cfg)
    out = Path(args.out)
    data.save_packed(ds, out)
    hist = dict(zip(ds.class_names, ds.class_counts().tolist()))
    width = max(len(n) for n in ds.class_names)
    top = max(hist.values()) or 1
    for name, count in hist.items():
        print(f"{name:<{width}} {count:>6} {'#' * round(40 * count / top)}")
    return {"output": str(out), "samples": len(ds), "class_histogram": hist,
            "splits": {k: len(v) for k, v in ds.splits.items()}}


def cmd_train(args, cfg) -> dict:
    ds = data.load_packed(args.data)
    tcfg = train_config(cfg, args.adversarial)
    model = build_model(cfg, ds)
    fit = train.adversarial_train if tcfg.adversarial else train.train
    model, history = fit(model, ds, tcfg)
    out = Path(args.out)
    history.checkpoint = str(out)
    xt, yt = ds.arrays("test")
    result = {"output": str(out), "history": history.to_dict(), "train_config": tcfg.to_dict(),
              "test_accuracy": _accuracy(model, xt, yt) if len(yt) else None,
              "params": nn.count_params(model), "flops": nn.estimate_flops(model)}
    nn.save_checkpoint(model, out, {"provenance": provenance(cfg), "train_config": tcfg.to_dict()})
    return result


def cmd_attack(args, cfg) -> dict:
    model, _ = nn.load_checkpoint(args.model)
    ds = data.load_packed(args.data)
    acfg = attack_config(cfg, attacks.check_name(args.attack))
    x, y = ds.arrays(args.split)
    rows = ds.split_indices(args.split)
    batch = attacks.run_attack(args.attack, model, x, y, acfg, indices=rows)
    clean, adv = _accuracy(model, x, y), _accuracy(model, batch.x_adv, y)
    result = {"attack": args.attack, "config": acfg.to_dict(), "split": args.split, "clean_accuracy": clean,
              "adversarial_accuracy": adv, "accuracy_drop_points": 100 * (clean - adv), "output": str(args.out)}
    attacks.save_adversarial(batch, ds, args.out, metadata={"metrics": result, "provenance": provenance(cfg)})
    return result


def cmd_scenarios(args, cfg) -> dict:
    ds = data.load_packed(args.data)
    name = cfg["attack"]["name"]
    report = metrics.four_scenario_eval(train_config(cfg).replace(adversarial=None), attack_config(cfg, name), ds,
                                        attack=name, build_model=lambda seed: build_model(cfg, ds, seed),
                                        mix_mode=cfg["train"]["mix_mode"])
    report.config["run_config"] = cfg
    out = Path(args.out)
    base = out.with_suffix("") if out.suffix == ".json" else out
    json_path, csv_path = base.with_suffix(".json"), base.with_suffix(".csv")
    json_path.write_text(report.to_json() + "\n")
    csv_path.write_text(report.to_csv())
    for c in report.cells:
        print(f"{c.train:<12}{c.test:<10}acc {100 * c.accuracy:6.2f}  macro-F1 {100 * c.macro_f1:6.2f}")
    return {"report": str(json_path), "csv": str(csv_path), "_no_sidecar": True}


def _is_logit_file(path: str) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == train.LOGIT_MAGIC


def cmd_distill(args, cfg) -> dict:
    ds = data.load_packed(args.data)
    kinds = {_is_logit_file(t) for t in args.teacher}
    if len(kinds) > 1:
        raise ConfigError("--teacher takes either checkpoints or one logit file, not a mix")
    tcfg = train_config(cfg).replace(adversarial=None)
    kd = train.KDConfig(cfg["kd"]["alpha"], cfg["kd"]["temperature"])
    xt, yt = ds.arrays("test")
    teacher_info = []
    if kinds == {True}:
        if len(args.teacher) != 1:
            raise ConfigError("only one teacher logit file may be given")
        source = train.import_teacher_logits(args.teacher[0], ds.class_count)
        teacher_info.append({"source": args.teacher[0], "kind": "logits"})
        sizes = {}
    else:
        source = [nn.load_checkpoint(p)[0] for p in args.teacher]
        for p, t in zip(args.teacher, source):
            teacher_info.append({"source": p, "kind": "checkpoint", "name": t.name,
                                 "test_accuracy": _accuracy(t, xt, yt)})
        ens_pred = np.exp(train.ensemble_logits(source, xt).data).argmax(axis=1)
        teacher_info.append({"source": "ensemble", "test_accuracy": float((ens_pred == yt).mean())})
        sizes = {f"teacher{i}:{t.name}": t for i, t in enumerate(source, start=1)}
        if len(source) > 1:
            per = [(nn.count_params(t), nn.estimate_flops(t)) for t in source]
            sizes["ensemble"] = metrics.ensemble_entry(per)
    scratch, _ = train.train(build_model(cfg, ds, default_arch="student"), ds, tcfg)
    student, history = train.distill(build_model(cfg, ds, default_arch="student"), source, ds, tcfg, kd)
    out = Path(args.out)
    history.checkpoint = str(out)
    nn.save_checkpoint(student, out, {"provenance": provenance(cfg), "kd": vars(kd), "teachers": teacher_info})
    size = metrics.size_efficiency_report({"student": student, **sizes}, reference="student")
    print(size.format_table())
    scratch_acc, student_acc = _accuracy(scratch, xt, yt), _accuracy(student, xt, yt)
    return {"output": str(out), "kd": vars(kd), "teachers": teacher_info,
            "scratch_test_accuracy": scratch_acc, "distilled_test_accuracy": student_acc,
            "gain_points": 100 * (student_acc - scratch_acc), "history": history.to_dict(),
            "size_report": size.to_dict()}


def cmd_explain(args, cfg) -> dict:
    model, _ = nn.load_checkpoint(args.model)
    ds = data.load_packed(args.data)
    if args.method not in explain.METHODS:
        raise ConfigError(f"unknown method {args.method!r}; valid methods: {', '.join(explain.METHODS)}")
    row = int(ds.positions_of([args.sample])[0])
    x = data.to_float(ds.images[row:row + 1])
    label = int(ds.labels[row])
    target = label if args.target is None else args.target
    layer = cfg["explain"]["layer"]
    smap = explain.attribution(args.method, model, x, target, layer, sample_id=args.sample)
    base = Path(args.out)
    raw = explain.export_heatmap(smap, x, "raw", base.with_name(f"{base.name}_{args.method}_raw.pgm"))
    over = explain.export_heatmap(smap, x, "overlay", base.with_name(f"{base.name}_{args.method}_overlay.ppm"))
    eps = cfg["explain"].get("attack_epsilon", cfg["attack"].get("epsilon", 8 / 255))
    shift = explain.focus_shift(model, x, label, args.method, layer,
                                attacks.default_config("fgsm", epsilon=eps, seed=cfg["seed"]), sample_index=row)
    return {"sample": args.sample, "label": label, "target_class": target, "method": args.method,
            "map_metadata": smap.metadata, "raw": str(raw), "overlay": str(over), "focus_shift": shift,
            "_sidecar_for": base.with_name(f"{base.name}_{args.method}")}


def cmd_embed(args, cfg) -> dict:
    model, _ = nn.load_checkpoint(args.model)
    ds = data.load_packed(args.data)
    x, y = ds.arrays(args.split)
    feats = model.features(x)
    perplexity = cfg["explain"].get("perplexity")
    if perplexity is None:
        # conventional 30, reduced for small splits so N >= 5·perplexity holds
        perplexity = min(30.0, len(y) / 5)
    emb = explain.tsne_embed(feats, perplexity, cfg["explain"]["iterations"], seed=cfg["seed"], labels=y)
    base = Path(args.out)
    csv_path = explain.export_embedding_csv(emb, base.with_suffix(".csv"), ds.class_names)
    svg_path = explain.export_embedding_svg(emb, base.with_suffix(".svg"), ds.class_names,
                                            title=f"t-SNE of {model.name} features ({args.split})")
    return {"csv": str(csv_path), "svg": str(svg_path), "points": len(y), "perplexity": perplexity,
            "final_kl": emb.kl, "iterations": emb.iterations, "max_entropy_error": emb.entropy_error,
            "_sidecar_for": base}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advleaf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"advleaf {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (default: $ADVLEAF_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic leaf dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a classifier, optionally adversarially")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--adversarial", metavar="ATTACK")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="attack a trained model on one split")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--attack", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("scenarios", help="regular/adversarial training x clean/attacked test")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scenarios)

    s = sub.add_parser("distill", help="distill a student from teacher checkpoints or a logit file")
    s.add_argument("--student-config", dest="config", required=True)
    s.add_argument("--teacher", action="append", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("explain", help="attribution map for one sample")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sample", type=int, required=True, help="sample id")
    s.add_argument("--method", required=True, help=", ".join(explain.METHODS))
    s.add_argument("--target", type=int, help="class to explain (default: true label)")
    s.add_argument("--out", required=True, help="output path prefix")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("embed", help="t-SNE of penultimate features")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True, help="output path prefix")
    s.set_defaults(func=cmd_embed)
    return p


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("ADVLEAF_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"ADVLEAF_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def _fail(code: str, exit_code: int, message: str) -> int:
    print(json.dumps({"error": code, "exit": exit_code, "message": message}), file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = _threads(args.threads)
        cfg = load_run_config(args.config)
        with threadpool_limits(limits=threads):
            result = args.func(args, cfg)
        if not result.pop("_no_sidecar", False):
            target = Path(result.pop("_sidecar_for", args.out))
            _write_json(_sidecar(target), {**result, "provenance": provenance(cfg), "command": args.command,
                                           "threads": threads})
    except AdvLeafError as e:
        return _fail(e.code, e.exit_code, str(e))
    except OSError as e:
        return _fail("E_IO", 4, str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
